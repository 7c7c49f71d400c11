//! Bit packing, the on-disk container and compression accounting.

mod bits;
mod container;
mod report;

pub use bits::{pack, packed_len, unpack, PackedIndices};
pub use container::{deserialize, from_bytes, serialize, to_bytes, MAGIC, TAG_CBOOK, TAG_IDX, TAG_META};
pub use report::{
    compression_report, nominal_index_bitwidth, CompressionReport, ReportOptions, ORIGINAL_DTYPE_BITS,
};
