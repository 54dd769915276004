//! Datasets: a deterministic synthetic pattern generator and an in-memory
//! hook for raw tensors.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `[C, H, W]`.
    fn image_shape(&self) -> [usize; 3];
    fn sample(&self, index: usize) -> (Tensor, usize);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images `[B, C, H, W]` and labels for `indices`.
    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (images, labels): (Vec<Tensor>, Vec<usize>) = indices.iter().map(|&i| self.sample(i)).unzip();
        Ok((Tensor::stack(&images)?, labels))
    }
}

/// Class-keyed oriented sinusoids plus seeded Gaussian noise, clipped to `[0, 1]`.
///
/// Sample `i` has class `i mod K`, so every run of `K` consecutive indices is
/// balanced. Indices at or beyond `len` are valid and serve as held-out data.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub len: usize,
    pub noise: f64,
    pub seed: u64,
}

pub const DEFAULT_NOISE: f64 = 0.1;

impl SyntheticDataset {
    pub fn new(channels: usize, height: usize, width: usize, classes: usize, len: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("synthetic dataset", format!("needs at least 2 classes, got {classes}")));
        }
        if channels == 0 || height == 0 || width == 0 || len == 0 {
            return Err(Error::invalid("synthetic dataset", "image dimensions and length must be positive"));
        }
        Ok(Self { channels, height, width, classes, len, noise: DEFAULT_NOISE, seed })
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise = sigma;
        self
    }

    /// Noise-free image of class `c`.
    pub fn pattern(&self, c: usize) -> Vec<f64> {
        let angle = PI * c as f64 / self.classes as f64;
        let freq = 1.5 + (c % 3) as f64;
        let (fy, fx) = (freq * angle.sin(), freq * angle.cos());
        let mut out = Vec::with_capacity(self.channels * self.height * self.width);
        for ch in 0..self.channels {
            let phase = ch as f64 * PI / 3.0;
            for y in 0..self.height {
                for x in 0..self.width {
                    let u = x as f64 / self.width as f64;
                    let v = y as f64 / self.height as f64;
                    out.push(0.5 + 0.35 * (2.0 * PI * (fx * u + fy * v) + phase).sin());
                }
            }
        }
        out
    }
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.len
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn sample(&self, index: usize) -> (Tensor, usize) {
        let class = index % self.classes;
        let mut data = self.pattern(class);
        if self.noise > 0.0 {
            let mut rng = SeededRng::derived(self.seed, &format!("sample{index}"));
            for v in &mut data {
                *v += self.noise * rng.normal();
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        let shape = vec![self.channels, self.height, self.width];
        (Tensor::new(shape, data).expect("pattern matches shape"), class)
    }
}

/// Raw images `[N, C, H, W]` with labels, e.g. decoded from an external source.
#[derive(Clone, Debug)]
pub struct InMemoryDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl InMemoryDataset {
    pub fn new(images: &Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::invalid(
                "in-memory dataset",
                format!("images {:?} do not match {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("in-memory dataset", format!("label {bad} out of range for {classes} classes")));
        }
        let images = (0..labels.len()).map(|i| images.slice0(i)).collect();
        Ok(Self { images, labels, classes })
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn image_shape(&self) -> [usize; 3] {
        let s = self.images[0].shape();
        [s[0], s[1], s[2]]
    }

    fn sample(&self, index: usize) -> (Tensor, usize) {
        let i = index % self.labels.len();
        (self.images[i].clone(), self.labels[i])
    }
}

/// Sample order for a run: each epoch is a seeded permutation of `0..len`.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    len: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { len, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = SeededRng::derived(self.seed, &format!("epoch{}", self.epoch));
        self.order = (0..self.len).collect();
        for i in (1..self.len).rev() {
            let j = rng.below(i + 1);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.len {
                self.epoch += 1;
                self.shuffle();
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

    #[test]
    fn deterministic_and_clipped() {
        let d = SyntheticDataset::new(3, 8, 8, 4, 64, 5).unwrap();
        let (a, la) = d.batch(&[0, 1, 2, 3]).unwrap();
        let (b, lb) = d.batch(&[0, 1, 2, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, vec![0, 1, 2, 3]);
        assert_eq!(la, lb);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noiseless_class_images_identical() {
        let d = SyntheticDataset::new(3, 8, 8, 4, 64, 5).unwrap().with_noise(0.0);
        assert_eq!(d.sample(1).0, d.sample(5).0);
        assert_ne!(d.sample(1).0, d.sample(2).0);
    }

    #[test]
    fn needs_two_classes() {
        assert!(SyntheticDataset::new(3, 8, 8, 1, 64, 5).is_err());
    }

    #[test]
    fn schedule_covers_each_epoch() {
        let mut s = BatchSchedule::new(10, 1);
        let mut first: Vec<usize> = s.next_batch(10);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut again = BatchSchedule::new(10, 1);
        again.next_batch(10);
        assert_eq!(s.next_batch(7), again.next_batch(7));
    }
}
