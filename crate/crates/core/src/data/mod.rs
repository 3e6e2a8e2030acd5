//! Datasets: synthetic graded-complexity domains and file loaders.

mod io;
mod synth;

pub use io::{load_dataset, save_csv, save_idx, DataFormat};
pub use synth::{generate_domain, GeneratorKind, SyntheticDomainSpec, GLYPH_COUNT};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

/// Labelled images `[n, C, H, W]` with values in `[0, 1]`.
///
/// Pixels are stored raw; normalization by `stats` is applied once, when a
/// batch is extracted.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
    stats: ChannelStats,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::Data(format!("degenerate image shape {shape:?}")));
        }
        if images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "image count {} does not match label count {}",
                images.len() / per,
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset { images, labels, shape, num_classes, stats: ChannelStats::identity(shape[0]) })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-channel mean and standard deviation of the raw pixels.
    pub fn compute_stats(&self) -> ChannelStats {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.images.chunks(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let std = (0..c)
            .map(|ch| {
                let m = mean[ch] / count;
                ((sq[ch] / count - m * m).max(0.0).sqrt() as f32).max(1e-3)
            })
            .collect();
        ChannelStats { mean: mean.iter().map(|m| (m / count) as f32).collect(), std }
    }

    pub fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.stats = stats;
        self
    }

    /// Normalized pixels and labels of the given samples.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut x = Vec::with_capacity(indices.len() * c * plane);
        for &i in indices {
            let img = self.image(i);
            for ch in 0..c {
                let (m, s) = (self.stats.mean[ch], self.stats.std[ch]);
                x.extend(img[ch * plane..(ch + 1) * plane].iter().map(|v| (v - m) / s));
            }
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.per_image();
        let mut images = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
            stats: self.stats.clone(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.shape != other.shape || self.num_classes != other.num_classes {
            return Err(Error::Data("cannot concatenate datasets of different layout".into()));
        }
        let mut images = self.images.clone();
        images.extend_from_slice(&other.images);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset { images, labels, shape: self.shape, num_classes: self.num_classes, stats: self.stats.clone() })
    }
}

/// Endless shuffled minibatch indices over a dataset; reshuffles each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        Ok(BatchSampler { order: (0..len).collect(), cursor: len, batch_size: batch_size.clamp(1, len) })
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> Dataset {
        let images = (0..4 * 12).map(|i| (i % 7) as f32 / 7.0).collect();
        Dataset::new(images, vec![0, 1, 1, 0], [3, 2, 2], 2).unwrap()
    }

    #[test]
    fn validates_counts_and_labels() {
        assert!(Dataset::new(vec![0.0; 12], vec![0, 1], [3, 2, 2], 2).is_err());
        assert!(Dataset::new(vec![0.0; 24], vec![0, 2], [3, 2, 2], 2).is_err());
        assert!(Dataset::new(vec![0.0; 24], vec![0, 0], [3, 2, 2], 1).is_err());
    }

    #[test]
    fn normalization_is_applied_at_batch_time() {
        let d = tiny();
        let stats = d.compute_stats();
        let d = d.with_stats(stats);
        let (x, y) = d.batch(&[0, 1, 2, 3]);
        assert_eq!(y, vec![0, 1, 1, 0]);
        for ch in 0..3 {
            let vals: Vec<f32> = (0..4).flat_map(|n| x[n * 12 + ch * 4..n * 12 + ch * 4 + 4].to_vec()).collect();
            let m: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            assert!(m.abs() < 1e-5);
        }
    }

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut s = BatchSampler::new(10, 5).unwrap();
        let mut rng = seeded(0);
        let mut seen: Vec<usize> = s.next_batch(&mut rng);
        seen.extend(s.next_batch(&mut rng));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(BatchSampler::new(0, 4).is_err());
    }
}
