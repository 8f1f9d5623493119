//! Perspective-guided convolution.
//!
//! Spatially variant Gaussian smoothing of feature maps, driven by a
//! perspective map and accelerated with a low-rank eigen-kernel dictionary,
//! together with a small trainable density-estimation network, a
//! perspective-estimation encoder-decoder, synthetic crowd scenes, and the
//! binary tensor container used to persist all of it.

pub mod conv;
pub mod density;
pub mod error;
pub mod kernel_dictionary;
pub mod io;
pub mod map;
pub mod nn;
pub mod penet;
pub mod perspective;
pub mod pgc_net;
pub mod tensor;
pub mod variant_filter;

pub use conv::PaddingMode;
pub use error::{PgcError, Result};
pub use kernel_dictionary::{
    build_dictionary, gaussian_kernel, DictionaryConfig, Kernel, KernelDictionary, NormalizationMode,
};
pub use map::{BlurMap, DensityMap, Map2, PerspectiveMap};
pub use perspective::{
    blur_from_perspective, normalize_perspective, row_mean_collapse, synth_perspective, PerspectiveParams,
};
pub use tensor::{relative_l2, Tensor, Tensor64};
pub use variant_filter::{bench_filter, coefficient_maps, filter_approx, filter_exact, BenchReport, CoefficientMaps};
