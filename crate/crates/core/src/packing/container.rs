//! The `.vptq` container.
//!
//! ```text
//! "VPTQ1"  u32 section_count
//! repeated: u16 tag, u64 payload_len, u32 crc32(payload), payload
//! ```
//!
//! All integers are little-endian. Sections:
//!
//! * `1` META: UTF-8 JSON with shape, config, layout, padding and stats.
//! * `2` CBOOK: `u8 role, u32 group, u16 v, u32 k`, then `k·v` f32 values.
//! * `3` IDX: `u8 role, u32 group, u8 bitwidth, u64 count`, then the packed
//!   stream. One section per codebook, columns in ascending order.
//!
//! Codebooks appear in the order they are referenced by META. Unknown tags
//! are skipped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bits::{pack, packed_len, unpack, PackedIndices};
use crate::codebook::{Codebook, CodebookRole};
use crate::error::{Error, Result};
use crate::quantizer::{GroupBand, Padding, QuantConfig, QuantStats, QuantizedMatrix};

pub const MAGIC: &[u8; 5] = b"VPTQ1";
pub const TAG_META: u16 = 1;
pub const TAG_CBOOK: u16 = 2;
pub const TAG_IDX: u16 = 3;

#[derive(Serialize, Deserialize)]
struct Meta {
    rows: usize,
    cols: usize,
    config: QuantConfig,
    padding: Padding,
    outlier_cols: Vec<usize>,
    bands: Vec<GroupBand>,
    outlier_codebook: Option<usize>,
    stats: QuantStats,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptContainer(msg.into())
}

fn push_section(out: &mut Vec<u8>, tag: u16, payload: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
}

fn index_payload(role: CodebookRole, group: u32, cb: &Codebook, columns: &[&[u32]]) -> Result<Vec<u8>> {
    let flat: Vec<u32> = columns.iter().flat_map(|c| c.iter().copied()).collect();
    let packed = pack(&flat, cb.index_bits() as u8)?;
    let mut p = Vec::with_capacity(14 + packed.bytes.len());
    p.push(role.tag());
    p.extend_from_slice(&group.to_le_bytes());
    p.push(packed.bitwidth);
    p.extend_from_slice(&(packed.count as u64).to_le_bytes());
    p.extend_from_slice(&packed.bytes);
    Ok(p)
}

pub fn to_bytes(qm: &QuantizedMatrix) -> Result<Vec<u8>> {
    qm.validate()?;
    let meta = Meta {
        rows: qm.rows,
        cols: qm.cols,
        config: qm.config.clone(),
        padding: qm.padding,
        outlier_cols: qm.outlier_cols.clone(),
        bands: qm.bands.clone(),
        outlier_codebook: qm.outlier_codebook,
        stats: qm.stats,
    };
    let mut sections: Vec<(u16, Vec<u8>)> = vec![(TAG_META, serde_json::to_vec(&meta)?)];

    for cb in &qm.codebooks {
        let mut p = Vec::with_capacity(11 + cb.centroids().len() * 4);
        p.push(cb.role().tag());
        p.extend_from_slice(&cb.group_id().to_le_bytes());
        p.extend_from_slice(&(cb.vector_len() as u16).to_le_bytes());
        p.extend_from_slice(&(cb.k() as u32).to_le_bytes());
        for x in cb.centroids() {
            p.extend_from_slice(&x.to_le_bytes());
        }
        sections.push((TAG_CBOOK, p));
    }

    if let Some(oc) = qm.outlier_codebook {
        let cols: Vec<&[u32]> = qm.outlier_indices.iter().map(Vec::as_slice).collect();
        let cb = &qm.codebooks[oc];
        sections.push((TAG_IDX, index_payload(CodebookRole::Outlier, cb.group_id(), cb, &cols)?));
    }
    let mut offset = 0;
    for (b, band) in qm.bands.iter().enumerate() {
        let n = qm.band_columns(b).len();
        let range = offset..offset + n;
        offset += n;
        let main = &qm.codebooks[band.main_codebook];
        let cols: Vec<&[u32]> = qm.main_indices[range.clone()].iter().map(Vec::as_slice).collect();
        sections.push((TAG_IDX, index_payload(CodebookRole::Main, main.group_id(), main, &cols)?));
        if let Some(r) = band.residual_codebook {
            let rcb = &qm.codebooks[r];
            let cols: Vec<&[u32]> = qm.residual_indices[range].iter().map(Vec::as_slice).collect();
            sections.push((TAG_IDX, index_payload(CodebookRole::Residual, rcb.group_id(), rcb, &cols)?));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in &sections {
        push_section(&mut out, *tag, payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn role_of(tag: u8) -> Result<CodebookRole> {
    CodebookRole::from_tag(tag).ok_or_else(|| corrupt(format!("unknown codebook role {tag}")))
}

struct IndexSection {
    role: CodebookRole,
    group: u32,
    values: Vec<u32>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<QuantizedMatrix> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a VPTQ1 container".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32()?;
    let mut meta: Option<Meta> = None;
    let mut codebooks = Vec::new();
    let mut index_sections = Vec::new();
    for _ in 0..count {
        let tag = r.u16()?;
        let len = usize::try_from(r.u64()?).map_err(|_| corrupt("section length overflow"))?;
        let crc = r.u32()?;
        let payload = r.take(len)?;
        if crc32fast::hash(payload) != crc {
            return Err(corrupt(format!("checksum mismatch in section with tag {tag}")));
        }
        let mut p = Reader { buf: payload, pos: 0 };
        match tag {
            TAG_META => {
                if meta.is_some() {
                    return Err(corrupt("duplicate META section"));
                }
                meta = Some(serde_json::from_slice(payload).map_err(|e| corrupt(format!("META: {e}")))?);
            }
            TAG_CBOOK => {
                let role = role_of(p.u8()?)?;
                let group = p.u32()?;
                let v = p.u16()? as usize;
                let k = p.u32()? as usize;
                let n = v.checked_mul(k).ok_or_else(|| corrupt("codebook size overflow"))?;
                let raw = p.take(n.checked_mul(4).ok_or_else(|| corrupt("codebook size overflow"))?)?;
                if !p.done() {
                    return Err(corrupt("trailing bytes in CBOOK"));
                }
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                codebooks.push(Codebook::new(v, values, role, group).map_err(|e| corrupt(format!("codebook: {e}")))?);
            }
            TAG_IDX => {
                let role = role_of(p.u8()?)?;
                let group = p.u32()?;
                let bitwidth = p.u8()?;
                let count = usize::try_from(p.u64()?).map_err(|_| corrupt("index count overflow"))?;
                let need = count
                    .checked_mul(bitwidth as usize)
                    .map(|_| packed_len(count, bitwidth))
                    .ok_or_else(|| corrupt("index count overflow"))?;
                let bytes = p.take(need)?.to_vec();
                if !p.done() {
                    return Err(corrupt("trailing bytes in IDX"));
                }
                let values = unpack(&PackedIndices { bitwidth, count, bytes })
                    .map_err(|e| corrupt(format!("indices: {e}")))?;
                index_sections.push(IndexSection { role, group, values });
            }
            _ => {}
        }
    }
    if !r.done() {
        return Err(corrupt("trailing bytes after the last section"));
    }
    let meta = meta.ok_or_else(|| corrupt("missing META section"))?;
    assemble(meta, codebooks, index_sections)
}

fn split_columns(values: &[u32], ncols: usize, per_col: usize) -> Result<Vec<Vec<u32>>> {
    if values.len() != ncols * per_col {
        return Err(corrupt(format!(
            "{} indices for {ncols} columns of {per_col}",
            values.len()
        )));
    }
    Ok(values.chunks(per_col.max(1)).take(ncols).map(<[u32]>::to_vec).collect())
}

fn assemble(meta: Meta, codebooks: Vec<Codebook>, sections: Vec<IndexSection>) -> Result<QuantizedMatrix> {
    let mut qm = QuantizedMatrix {
        rows: meta.rows,
        cols: meta.cols,
        config: meta.config,
        padding: meta.padding,
        outlier_cols: meta.outlier_cols,
        bands: meta.bands,
        outlier_codebook: meta.outlier_codebook,
        codebooks,
        main_indices: Vec::new(),
        residual_indices: Vec::new(),
        outlier_indices: Vec::new(),
        stats: meta.stats,
    };
    let mut taken = vec![false; sections.len()];
    let mut take = |role: CodebookRole, group: u32| -> Result<&[u32]> {
        let pos = sections
            .iter()
            .enumerate()
            .position(|(i, s)| !taken[i] && s.role == role && s.group == group)
            .ok_or_else(|| corrupt(format!("no {role:?} indices for group {group}")))?;
        taken[pos] = true;
        Ok(&sections[pos].values)
    };

    if let Some(oc) = qm.outlier_codebook {
        let cb = qm.codebooks.get(oc).ok_or_else(|| corrupt("outlier codebook missing"))?;
        let per = qm.rows.div_ceil(cb.vector_len());
        qm.outlier_indices = split_columns(take(CodebookRole::Outlier, cb.group_id())?, qm.outlier_cols.len(), per)?;
    }
    for b in 0..qm.bands.len() {
        let band = qm.bands[b].clone();
        let ncols = qm.band_columns(b).len();
        let main = qm.codebooks.get(band.main_codebook).ok_or_else(|| corrupt("main codebook missing"))?;
        let per = qm.rows.div_ceil(main.vector_len());
        let cols = split_columns(take(CodebookRole::Main, main.group_id())?, ncols, per)?;
        qm.main_indices.extend(cols);
        if let Some(r) = band.residual_codebook {
            let rcb = qm.codebooks.get(r).ok_or_else(|| corrupt("residual codebook missing"))?;
            let per = qm.rows.div_ceil(rcb.vector_len());
            let cols = split_columns(take(CodebookRole::Residual, rcb.group_id())?, ncols, per)?;
            qm.residual_indices.extend(cols);
        }
    }
    qm.validate()?;
    Ok(qm)
}

pub fn serialize(qm: &QuantizedMatrix, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(qm)?)?;
    Ok(())
}

pub fn deserialize(path: impl AsRef<Path>) -> Result<QuantizedMatrix> {
    from_bytes(&std::fs::read(path)?)
}
