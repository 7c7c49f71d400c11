use std::ops::Add;

use num_rational::Ratio;
use serde::Serialize;

use crate::quantizer::QuantConfig;

/// Bits per original weight and per codebook entry in the accounting.
pub const ORIGINAL_DTYPE_BITS: u128 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportOptions {
    /// Multiply codebook entries by the 16-bit dtype width. Turning this off
    /// counts one bit per codebook entry, the convention of the short worked
    /// example that lands on exactly 16.00 for `v=8, k=256`.
    pub codebook_dtype_factor: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            codebook_dtype_factor: true,
        }
    }
}

/// Exact bit accounting for one or more matrices. Derived quantities are
/// exact rationals; `*_f64` helpers are for display only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CompressionReport {
    pub params: u128,
    pub total_original_bits: u128,
    pub codebook_bits: u128,
    pub index_bits: u128,
}

impl Add for CompressionReport {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            params: self.params + o.params,
            total_original_bits: self.total_original_bits + o.total_original_bits,
            codebook_bits: self.codebook_bits + o.codebook_bits,
            index_bits: self.index_bits + o.index_bits,
        }
    }
}

impl std::iter::Sum for CompressionReport {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn to_f64(r: Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl CompressionReport {
    pub fn compressed_bits(&self) -> u128 {
        self.codebook_bits + self.index_bits
    }

    pub fn compression_ratio(&self) -> Ratio<u128> {
        Ratio::new(self.total_original_bits, self.compressed_bits())
    }

    /// `16 / compression_ratio`, i.e. compressed bits per weight.
    pub fn equivalent_bitwidth(&self) -> Ratio<u128> {
        Ratio::new(self.compressed_bits(), self.params)
    }

    pub fn average_index_bitwidth(&self) -> Ratio<u128> {
        Ratio::new(self.index_bits, self.params)
    }

    pub fn codebook_overhead_per_param(&self) -> Ratio<u128> {
        Ratio::new(self.codebook_bits, self.params)
    }

    pub fn compression_ratio_f64(&self) -> f64 {
        to_f64(self.compression_ratio())
    }

    pub fn equivalent_bitwidth_f64(&self) -> f64 {
        to_f64(self.equivalent_bitwidth())
    }

    pub fn average_index_bitwidth_f64(&self) -> f64 {
        to_f64(self.average_index_bitwidth())
    }

    pub fn codebook_overhead_per_param_f64(&self) -> f64 {
        to_f64(self.codebook_overhead_per_param())
    }

    /// Fixed-order `key=value` lines, prefixed with `prefix`.
    pub fn key_values(&self, prefix: &str) -> String {
        format!(
            "{p}params={}\n{p}total_original_bits={}\n{p}codebook_bits={}\n{p}index_bits={}\n\
             {p}compression_ratio={:.4}\n{p}equivalent_bitwidth={:.6}\n\
             {p}average_index_bitwidth={:.6}\n{p}codebook_overhead_bits_per_param={:.6}\n",
            self.params,
            self.total_original_bits,
            self.codebook_bits,
            self.index_bits,
            self.compression_ratio_f64(),
            self.equivalent_bitwidth_f64(),
            self.average_index_bitwidth_f64(),
            self.codebook_overhead_per_param_f64(),
            p = prefix,
        )
    }
}

fn log2(k: usize) -> u128 {
    k.trailing_zeros() as u128
}

/// Accounting for an `rows × cols` matrix quantized with `cfg`, of which
/// `outlier_count` columns go to the outlier codebook. Vector counts include
/// the zero padding of each column.
pub fn compression_report(
    rows: usize,
    cols: usize,
    cfg: &QuantConfig,
    outlier_count: usize,
    opts: ReportOptions,
) -> CompressionReport {
    let (m, n) = (rows as u128, cols as u128);
    let outliers = outlier_count.min(cols) as u128;
    let main_cols = n - outliers;
    let dtype = if opts.codebook_dtype_factor {
        ORIGINAL_DTYPE_BITS
    } else {
        1
    };

    let mut entries = 0u128;
    let mut index_bits = 0u128;
    if outliers > 0 {
        entries += (cfg.v0 * cfg.k0) as u128;
        index_bits += outliers * rows.div_ceil(cfg.v0) as u128 * log2(cfg.k0);
    }
    if main_cols > 0 {
        entries += (cfg.group_num * cfg.v1 * (cfg.k1 + cfg.k2)) as u128;
        let per_vector = log2(cfg.k1) + if cfg.k2 > 0 { log2(cfg.k2) } else { 0 };
        index_bits += main_cols * rows.div_ceil(cfg.v1) as u128 * per_vector;
    }
    CompressionReport {
        params: m * n,
        total_original_bits: ORIGINAL_DTYPE_BITS * m * n,
        codebook_bits: dtype * entries,
        index_bits,
    }
}

/// `(log₂k₁ + log₂k₂) / v₁` with `k₂ = 0` meaning no residual stage.
pub fn nominal_index_bitwidth(v1: usize, k1: usize, k2: usize) -> Ratio<u128> {
    let bits = log2(k1) + if k2 > 0 { log2(k2) } else { 0 };
    Ratio::new(bits, v1 as u128)
}
