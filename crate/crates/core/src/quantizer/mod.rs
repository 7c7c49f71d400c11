//! Column-by-column vector quantization with second-order error feedback.

mod column;
mod config;
mod matrix;
mod metrics;
mod model;

pub use column::{
    delta_l, propagate_error, quantize_column, reshape_column, unreshape_column, ColumnCode,
    WorkMatrix,
};
pub use config::{ColumnOrder, Propagation, QuantConfig, MAX_K};
pub use matrix::{
    dequantize, quantize_matrix, select_outlier_columns, GroupBand, Padding, QuantizedMatrix,
};
pub use metrics::{
    proxy_loss, proxy_loss_decomposition, reconstruction_error, QuantStats, ReconstructionError,
};
pub use model::{quantize_layers, quantize_model, read_manifest, LayerOutcome, ManifestEntry};
