//! Shared fixtures for the pipeline benchmarks.

use dms_core::data::{synth_blobs, Dataset};
use dms_core::{KernelModel, KernelVariant};

/// Five 16-dimensional blobs, the shape used throughout the benchmarks.
pub fn blobs(per_blob: usize) -> Dataset {
    synth_blobs(5, per_blob, 16, 1.0, 20.0, 0).expect("blob placement")
}

pub fn kernel(variant: KernelVariant) -> KernelModel {
    KernelModel::he_initialized(16, variant, dms_core::kernels::DEFAULT_FC_LAYERS, 0).expect("valid dims")
}
