//! Dataset ingestion and preprocessing: PPM decoding, class scanning,
//! exclusion and stratified splits, resize/normalize, augmentation, batch
//! assembly and the synthetic ship corpus.

pub mod dataset;
pub mod image;
pub mod loader;
pub mod ppm;
pub mod synth;

pub use dataset::{CleaningReport, Dataset, Sample, SampleSource};
pub use image::{augment, normalize, resize_bilinear, AugmentParams, Image, Normalization};
pub use loader::{Batch, LoaderConfig, PreparedSet};
pub use ppm::{decode_ppm, encode_ppm};
pub use synth::{generate_synthetic, Family, SynthSpec};

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
