//! Batch assembly. Per-sample work (augmentation, normalization) may be
//! spread over worker threads; each sample draws from its own RNG stream
//! and results are written back by position, so batches are identical for
//! any worker count.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::image::{normalize, AugmentParams, Image, Normalization};
use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// Decoded images resized to the model input, kept in memory.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub classes: Vec<String>,
    pub images: Vec<Arc<Image>>,
    pub labels: Vec<usize>,
}

/// Runs `f` over `0..n`, in `workers` contiguous chunks, keeping order.
pub fn parallel_map<R: Send>(n: usize, workers: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

impl PreparedSet {
    pub fn load(ds: &Dataset, size: (usize, usize), workers: usize) -> Result<Self> {
        let images = parallel_map(ds.len(), workers, |i| ds.samples[i].load_resized(size).map(Arc::new))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSet {
            classes: ds.classes.clone(),
            images,
            labels: ds.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height(), i.width()))
    }

    pub fn normalization(&self) -> Result<Normalization> {
        Normalization::from_images(self.images.iter().map(|i| &**i))
    }
}

#[derive(Clone, Debug)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub augment: bool,
    pub max_rotation: f64,
    pub normalization: Normalization,
    pub workers: usize,
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Sample order for one epoch: a seeded permutation, or identity.
pub fn epoch_order(n: usize, shuffle: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// RNG for sample `index` under `epoch_seed`.
pub fn sample_rng(epoch_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(index as u64);
    rng
}

/// One preprocessed sample: optional augmentation, then normalization.
pub fn prepare_sample(set: &PreparedSet, index: usize, cfg: &LoaderConfig, epoch_seed: u64) -> Result<Image> {
    let img = &set.images[index];
    let img = if cfg.augment {
        AugmentParams::sample(&mut sample_rng(epoch_seed, index), cfg.max_rotation).apply(img)
    } else {
        (**img).clone()
    };
    normalize(&img, &cfg.normalization)
}

pub fn assemble_batch<T: Scalar>(
    set: &PreparedSet,
    indices: &[usize],
    cfg: &LoaderConfig,
    epoch_seed: u64,
) -> Result<Batch<T>> {
    let (h, w) = set
        .size()
        .ok_or_else(|| invalid!("cannot batch an empty sample set"))?;
    let parts = parallel_map(indices.len(), cfg.workers, |k| prepare_sample(set, indices[k], cfg, epoch_seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
    for p in parts {
        data.extend(p.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Batch {
        images: Tensor::new(&[indices.len(), 3, h, w], data)?,
        labels: indices.iter().map(|&i| set.labels[i]).collect(),
        indices: indices.to_vec(),
    })
}

/// Batches over `order` in chunks of `batch_size` (last one may be short).
pub fn batches<'a, T: Scalar>(
    set: &'a PreparedSet,
    order: &'a [usize],
    cfg: &'a LoaderConfig,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'a> {
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    Ok(order
        .chunks(cfg.batch_size)
        .map(move |idx| assemble_batch(set, idx, cfg, epoch_seed)))
}
