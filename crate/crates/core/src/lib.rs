//! Content-based image retrieval with Radon barcodes.
//!
//! Images are resampled to a small square grid, projected with a discrete
//! Radon transform, and turned into two artifacts: a normalized feature
//! vector that trains a one-against-one RBF SVM, and a binary barcode stored
//! in a per-class index. A query is classified first, then matched by Hamming
//! distance against the barcodes of its predicted class only.
//!
//! - [`imaging`]: decoding, resampling, Radon transform
//! - [`barcode`]: median thresholding and Hamming distance
//! - [`svm`]: SMO training and one-against-one voting
//! - [`index`]: per-class barcode buckets, kNN and persistence
//! - [`eval`]: IRMA code error and accuracy
//! - [`pipeline`]: training and retrieval stages over manifests
//! - [`synthetic`]: procedurally generated shape corpora

mod codec;

pub mod barcode;
pub mod eval;
pub mod imaging;
pub mod index;
pub mod pipeline;
pub mod svm;
pub mod synthetic;

pub use barcode::{generate_barcode, hamming_distance, BarcodeShape, RadonBarcode};
pub use codec::DecodeError;
pub use eval::{IrmaCode, RetrievalReport};
pub use imaging::{GrayImage, NormalizedImage, RadonConfig, RadonFeatures};
pub use index::{BarcodeIndex, IndexedImage, RankedResult};
pub use pipeline::PipelineError;
pub use svm::{MulticlassSvm, SvmParams};
