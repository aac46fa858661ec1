//! Labelled image sets and the synthetic task used for desk-scale runs.
//!
//! Each synthetic image is Gaussian background noise with one square
//! "object" placed at a random patch-aligned location. The object tiles a
//! fixed per-class sign pattern, optionally negated at random, so the class
//! token has to find it among noise patches and the class is carried by the
//! pattern rather than the mean intensity.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEMPLATE_STREAM: u64 = 0x7e3a_51c9_d20f_8b46;

pub const DATA_FORMAT: &str = "amg-data-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[samples, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dims("dataset", images.shape(), &[labels.len()]));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Consecutive minibatches in stored order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Dataset>> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |start| {
            let idx: Vec<usize> = (start..(start + bs).min(self.len())).collect();
            self.subset(&idx)
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = DataHeader {
            format: DATA_FORMAT.into(),
            shape: self.images.shape().to_vec(),
            labels: self.labels.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for x in self.images.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: DataHeader = serde_json::from_str(line.trim_end())?;
        if header.format != DATA_FORMAT {
            return Err(Error::Config(format!("unsupported dataset format {:?}", header.format)));
        }
        let n: usize = header.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::new(Tensor::new(header.shape, data)?, header.labels)
    }
}

#[derive(Serialize, Deserialize)]
struct DataHeader {
    format: String,
    shape: Vec<usize>,
    labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Side of the textured square, pixels.
    pub object_size: usize,
    /// Object positions are multiples of this stride.
    pub placement_stride: usize,
    pub amplitude: f64,
    /// Side of the class template; the object tiles it.
    pub template_size: usize,
    /// Multiply each object by a random sign, so the class is carried by
    /// the pattern and not by the pixel mean.
    pub sign_flip: bool,
    pub noise: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 16,
            channels: 3,
            num_classes: 4,
            object_size: 8,
            placement_stride: 4,
            amplitude: 1.0,
            template_size: 4,
            sign_flip: true,
            noise: 1.5,
            train_size: 1024,
            val_size: 256,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.object_size == 0 || self.object_size > self.image_size {
            return Err(Error::Config("object_size must be in 1..=image_size".into()));
        }
        if self.template_size == 0 || self.object_size % self.template_size != 0 {
            return Err(Error::Config("template_size must divide object_size".into()));
        }
        if self.num_classes == 0 || self.channels == 0 || self.placement_stride == 0 {
            return Err(Error::Config(
                "num_classes, channels and placement_stride must be positive".into(),
            ));
        }
        if !(self.amplitude > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("amplitude must be positive and noise non-negative".into()));
        }
        Ok(())
    }

    /// Deterministic `(train, val)` splits drawn from one seeded stream.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let templates = self.templates();
        let train = self.draw(&mut rng, &templates, self.train_size)?;
        let val = self.draw(&mut rng, &templates, self.val_size)?;
        Ok((train, val))
    }

    /// One fixed `C x template_size x template_size` sign pattern per class.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ TEMPLATE_STREAM);
        let n = self.channels * self.template_size * self.template_size;
        (0..self.num_classes)
            .map(|_| (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())
            .collect()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, templates: &[Vec<f64>], count: usize) -> Result<Dataset> {
        let (s, c, o, t) = (self.image_size, self.channels, self.object_size, self.template_size);
        let positions = (s - o) / self.placement_stride + 1;
        let mut data = Vec::with_capacity(count * c * s * s);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % self.num_classes;
            let oy = rng.random_range(0..positions) * self.placement_stride;
            let ox = rng.random_range(0..positions) * self.placement_stride;
            let sign = if self.sign_flip && rng.random_bool(0.5) { -1.0 } else { 1.0 };
            for ch in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let mut v = self.noise * rng.sample::<f64, _>(StandardNormal);
                        if (oy..oy + o).contains(&y) && (ox..ox + o).contains(&x) {
                            let (ty, tx) = ((y - oy) % t, (x - ox) % t);
                            v += sign * self.amplitude * templates[label][(ch * t + ty) * t + tx];
                        }
                        data.push(v);
                    }
                }
            }
            labels.push(label);
        }
        Dataset::new(Tensor::new(vec![count, c, s, s], data)?, labels)
    }
}
