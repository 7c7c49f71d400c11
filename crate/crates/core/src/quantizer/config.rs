use serde::{Deserialize, Deserializer, Serialize};

use crate::codebook::{CodebookRole, TrainOptions};
use crate::hessian::DEFAULT_DAMPING;

/// Largest centroid count a codebook may have (16-bit indices).
pub const MAX_K: usize = 1 << 16;

/// Order in which columns are visited by the main pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnOrder {
    #[default]
    Natural,
    DescendingHessianDiag,
}

/// How a quantized column's error is pushed into the columns not yet visited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Inverse Hessian restricted to the still-unquantized columns, updated
    /// after every column (Cholesky factor of the permuted inverse).
    #[default]
    Sequential,
    /// Rows of the full inverse Hessian `H⁻¹_{q,:} / H⁻¹_qq`, computed once.
    FixedInverse,
    /// `H_{q,:} / H⁻¹_qq`, a row-based variant. Kept for experiments.
    HessianRow,
    /// No error feedback; every column is quantized independently.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    /// Main vector length.
    pub v1: usize,
    /// Main centroid count.
    pub k1: usize,
    /// Residual centroid count, 0 when the residual stage is off (`-1` is accepted on input).
    #[serde(deserialize_with = "residual_k")]
    pub k2: usize,
    /// Outlier vector length.
    pub v0: usize,
    /// Outlier centroid count.
    pub k0: usize,
    /// Share of columns, in percent, routed to the outlier codebook.
    pub outlier_percent: f64,
    /// Number of independent main codebooks (contiguous column bands).
    pub group_num: usize,
    pub damping_fraction: f64,
    pub column_order: ColumnOrder,
    pub propagation: Propagation,
    pub kmeans: TrainOptions,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            v1: 6,
            k1: 4096,
            k2: 0,
            v0: 4,
            k0: 4096,
            outlier_percent: 0.0,
            group_num: 1,
            damping_fraction: DEFAULT_DAMPING,
            column_order: ColumnOrder::Natural,
            propagation: Propagation::Sequential,
            kmeans: TrainOptions::default(),
        }
    }
}

fn residual_k<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
    let raw = i64::deserialize(d)?;
    match raw {
        -1 | 0 => Ok(0),
        k if k > 0 => Ok(k as usize),
        k => Err(serde::de::Error::custom(format!("k2 must be -1, 0 or positive, got {k}"))),
    }
}

fn check_k(name: &str, k: usize, problems: &mut Vec<String>) {
    if k < 2 || !k.is_power_of_two() || k > MAX_K {
        problems.push(format!("{name} = {k} must be a power of two in [2, {MAX_K}]"));
    }
}

impl QuantConfig {
    /// Every violated constraint, so they can be reported together.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.v1 == 0 || self.v1 > u16::MAX as usize {
            problems.push(format!("v1 = {} must be in [1, {}]", self.v1, u16::MAX));
        }
        check_k("k1", self.k1, &mut problems);
        if self.k2 != 0 {
            check_k("k2", self.k2, &mut problems);
        }
        if !(0.0..=100.0).contains(&self.outlier_percent) {
            problems.push(format!(
                "outlier_percent = {} must be within [0, 100]",
                self.outlier_percent
            ));
        }
        if self.outlier_percent > 0.0 {
            if self.v0 == 0 || self.v0 > u16::MAX as usize {
                problems.push(format!("v0 = {} must be in [1, {}]", self.v0, u16::MAX));
            }
            check_k("k0", self.k0, &mut problems);
        }
        if self.group_num == 0 {
            problems.push("group_num must be at least 1".to_string());
        }
        if !self.damping_fraction.is_finite() || self.damping_fraction <= 0.0 {
            problems.push(format!(
                "damping_fraction = {} must be positive",
                self.damping_fraction
            ));
        }
        problems.extend(self.kmeans.validate());
        problems
    }

    pub fn residual_enabled(&self) -> bool {
        self.k2 > 0
    }

    /// `⌊outlier_percent · cols / 100⌋`.
    pub fn outlier_count(&self, cols: usize) -> usize {
        outlier_count(self.outlier_percent, cols)
    }

    /// Training options for one codebook; the seed is mixed with role and group
    /// so codebooks in one matrix draw from independent streams.
    pub fn stage_options(&self, role: CodebookRole, group: u32) -> TrainOptions {
        let mut opts = self.kmeans.clone();
        opts.seed = splitmix64(self.kmeans.seed ^ ((role.tag() as u64) << 32 | group as u64));
        opts
    }
}

pub(crate) fn outlier_count(percent: f64, cols: usize) -> usize {
    if percent.is_nan() || percent <= 0.0 {
        return 0;
    }
    // the epsilon keeps e.g. 1% of 300 from landing on 2.9999…
    let raw = (percent * cols as f64 / 100.0 + 1e-9).floor();
    (raw as usize).min(cols)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_json_with_minus_one_residual() {
        let cfg: QuantConfig =
            serde_json::from_str(r#"{"v1": 8, "k1": 256, "k2": -1, "kmeans": {"seed": 7}}"#).unwrap();
        assert_eq!(cfg.k2, 0);
        assert_eq!(cfg.v1, 8);
        assert_eq!(cfg.kmeans.seed, 7);
        assert_eq!(cfg.kmeans.max_iters, 100);
        assert!(cfg.validate().is_empty());
    }

    #[test]
    fn lists_every_problem() {
        let cfg = QuantConfig {
            v1: 0,
            k1: 3,
            k2: 5,
            outlier_percent: 1.0,
            k0: 1,
            group_num: 0,
            damping_fraction: 0.0,
            ..QuantConfig::default()
        };
        assert_eq!(cfg.validate().len(), 6);
    }

    #[test]
    fn outlier_count_floors() {
        assert_eq!(outlier_count(0.0, 100), 0);
        assert_eq!(outlier_count(100.0, 7), 7);
        assert_eq!(outlier_count(20.0, 10), 2);
        assert_eq!(outlier_count(1.0, 300), 3);
        assert_eq!(outlier_count(1.0, 99), 0);
    }

    #[test]
    fn stage_seeds_differ_by_role_and_group() {
        let cfg = QuantConfig::default();
        let a = cfg.stage_options(CodebookRole::Main, 0).seed;
        let b = cfg.stage_options(CodebookRole::Main, 1).seed;
        let c = cfg.stage_options(CodebookRole::Residual, 0).seed;
        assert!(a != b && a != c && b != c);
    }
}
