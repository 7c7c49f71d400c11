use crate::error::{Error, Result};

/// Indices of a fixed bit width packed LSB-first: index `i` occupies stream
/// bits `[i·bw, (i+1)·bw)` and stream bit `b` is bit `b % 8` of byte `b / 8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedIndices {
    pub bitwidth: u8,
    pub count: usize,
    pub bytes: Vec<u8>,
}

fn check_bitwidth(bitwidth: u8) -> Result<()> {
    if (1..=16).contains(&bitwidth) {
        Ok(())
    } else {
        Err(Error::InvalidOptions(format!("bitwidth {bitwidth} outside 1..=16")))
    }
}

pub fn packed_len(count: usize, bitwidth: u8) -> usize {
    (count * bitwidth as usize).div_ceil(8)
}

pub fn pack(indices: &[u32], bitwidth: u8) -> Result<PackedIndices> {
    check_bitwidth(bitwidth)?;
    let bw = bitwidth as usize;
    let limit = 1u32 << bw;
    let mut bytes = vec![0u8; packed_len(indices.len(), bitwidth)];
    for (i, &x) in indices.iter().enumerate() {
        if x >= limit {
            return Err(Error::IndexOverflow(i));
        }
        let mut bit = i * bw;
        let mut value = x;
        let mut left = bw;
        while left > 0 {
            let offset = bit % 8;
            let take = (8 - offset).min(left);
            bytes[bit / 8] |= ((value & ((1 << take) - 1)) as u8) << offset;
            value >>= take;
            bit += take;
            left -= take;
        }
    }
    Ok(PackedIndices {
        bitwidth,
        count: indices.len(),
        bytes,
    })
}

pub fn unpack(p: &PackedIndices) -> Result<Vec<u32>> {
    check_bitwidth(p.bitwidth)?;
    let bw = p.bitwidth as usize;
    if p.bytes.len() != packed_len(p.count, p.bitwidth) {
        return Err(Error::CorruptStream(format!(
            "{} bytes for {} indices of {bw} bits",
            p.bytes.len(),
            p.count
        )));
    }
    let used = p.count * bw;
    if !used.is_multiple_of(8) {
        let tail = p.bytes[used / 8] >> (used % 8);
        if tail != 0 {
            return Err(Error::CorruptStream("nonzero padding bits".into()));
        }
    }
    let mut out = Vec::with_capacity(p.count);
    for i in 0..p.count {
        let mut bit = i * bw;
        let mut value = 0u32;
        let mut filled = 0;
        while filled < bw {
            let offset = bit % 8;
            let take = (8 - offset).min(bw - filled);
            let chunk = (p.bytes[bit / 8] >> offset) as u32 & ((1 << take) - 1);
            value |= chunk << filled;
            filled += take;
            bit += take;
        }
        out.push(value);
    }
    Ok(out)
}
