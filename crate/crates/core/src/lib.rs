//! Key-length prediction for Vigenère ciphertexts.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: plaintext ingestion, cleaning and segmentation
//! - [`cipher`]: Vigenère encryption and labelled key generation
//! - [`analysis`]: the statistical features (IC, twist family, Kasiski, Matthews, entropy)
//! - [`estimators`]: the classical argmax / formula key-length predictors
//! - [`nn`]: a small dense classifier trained with Adam
//! - [`pipeline`]: dataset generation, feature masks, experiments and reports
//! - [`cli`]: the `vigkey` command-line front end

pub mod analysis;
pub mod cipher;
pub mod cli;
pub mod corpus;
pub mod estimators;
pub mod nn;
pub mod pipeline;

pub use analysis::{feature_vector, FeatureSchema, FeatureVector};
pub use cipher::{decrypt, encrypt, Key};
pub use corpus::{clean_text, CleanText};
pub use estimators::{DomainSpec, Method, Prediction};
pub use nn::{NetworkModel, TrainConfig};
pub use pipeline::{EvaluationReport, FeatureMask};

/// Smallest key length the toolkit labels and predicts.
pub const MIN_KEY_LEN: usize = 3;
/// Largest key length the toolkit labels and predicts.
pub const MAX_KEY_LEN: usize = 25;
/// Number of key-length classes (3..=25).
pub const NUM_CLASSES: usize = MAX_KEY_LEN - MIN_KEY_LEN + 1;

/// Deterministic RNG for one independent stream (document, sample, ...) of a master seed.
///
/// Streams do not overlap, so work split by stream index yields identical output
/// regardless of the order in which streams are consumed.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
