//! Hybrid frequency-domain / image-domain reconstruction of undersampled
//! MR k-space.
//!
//! The pipeline is a residual U-net operating on two-channel (real,
//! imaginary) k-space, a parameter-free magnitude-iDFT bridge, and an
//! image-domain U-net, trained end to end with a weighted sum of NRMSE
//! terms in both domains.
//!
//! Modules:
//! * [`kspace`]: centered orthonormal FFTs, Gaussian sampling masks,
//!   normalization and zero-filled reconstruction.
//! * [`synthdata`]: synthetic raw k-space volumes, dataset splits and the
//!   `CKS1` container format.
//! * [`nets`]: U-net building blocks, the hybrid model and the baseline.
//! * [`training`]: the dual-domain loss, Adam and the training loop.
//! * [`metrics`]: NRMSE, SSIM, PSNR, paired t-tests and evaluation reports.

pub mod container;
pub mod error;
pub mod kspace;
pub mod metrics;
pub mod nets;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use kspace::{ComplexKSpace, MagnitudeImage, NormStats, SamplingMask};
pub use num_complex::Complex64;

/// Mixes a stream index into a base seed (SplitMix64 finalizer), so that
/// per-subject, per-slice and per-epoch generators are independent but
/// reproducible.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
