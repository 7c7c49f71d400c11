#!/usr/bin/env python3
"""Reference reader for .vptq containers.

Decodes a container from its documented byte layout and writes the
dequantized matrix as a float32 NPY file. Usage:

    unpack_vptq.py IN.vptq OUT.npy
"""

import json
import struct
import sys
import zlib

import numpy as np

TAG_META, TAG_CBOOK, TAG_IDX = 1, 2, 3
ROLE_MAIN, ROLE_RESIDUAL, ROLE_OUTLIER = 0, 1, 2


def unpack_bits(data, bitwidth, count):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bits = bits[: count * bitwidth].reshape(count, bitwidth).astype(np.uint32)
    return (bits << np.arange(bitwidth, dtype=np.uint32)).sum(axis=1).astype(np.int64)


def read_container(raw):
    if raw[:5] != b"VPTQ1":
        raise ValueError("bad magic")
    (count,) = struct.unpack_from("<I", raw, 5)
    pos = 9
    meta, codebooks, indices = None, [], {}
    for _ in range(count):
        tag, length, crc = struct.unpack_from("<HQI", raw, pos)
        pos += 14
        payload = raw[pos : pos + length]
        pos += length
        if len(payload) != length or zlib.crc32(payload) != crc:
            raise ValueError("corrupt section")
        if tag == TAG_META:
            meta = json.loads(payload)
        elif tag == TAG_CBOOK:
            role, group, v, k = struct.unpack_from("<BIHI", payload, 0)
            values = np.frombuffer(payload, dtype="<f4", offset=11, count=v * k)
            codebooks.append(values.reshape(k, v))
        elif tag == TAG_IDX:
            role, group, bw, n = struct.unpack_from("<BIBQ", payload, 0)
            indices[(role, group)] = unpack_bits(payload[14:], bw, n)
    return meta, codebooks, indices


def dequantize(meta, codebooks, indices):
    rows, cols = meta["rows"], meta["cols"]
    out = np.zeros((rows, cols), dtype=np.float32)
    outliers = meta["outlier_cols"]

    def columns(idx, cb, ncols):
        per = -(-rows // cb.shape[1])
        return idx.reshape(ncols, per)

    if meta["outlier_codebook"] is not None:
        cb = codebooks[meta["outlier_codebook"]]
        idx = columns(indices[(ROLE_OUTLIER, 0)], cb, len(outliers))
        for q, col in zip(outliers, idx):
            out[:, q] = cb[col].reshape(-1)[:rows]
    outlier_set = set(outliers)
    for g, band in enumerate(meta["bands"]):
        members = [q for q in range(band["col_start"], band["col_end"]) if q not in outlier_set]
        cb = codebooks[band["main_codebook"]]
        idx = columns(indices[(ROLE_MAIN, g)], cb, len(members))
        res = None
        if band["residual_codebook"] is not None:
            rcb = codebooks[band["residual_codebook"]]
            res = columns(indices[(ROLE_RESIDUAL, g)], rcb, len(members))
        for i, q in enumerate(members):
            vec = cb[idx[i]]
            if res is not None:
                vec = (vec + rcb[res[i]]).astype(np.float32)
            out[:, q] = vec.reshape(-1)[:rows]
    return out


def main():
    src, dst = sys.argv[1], sys.argv[2]
    with open(src, "rb") as f:
        meta, codebooks, indices = read_container(f.read())
    np.save(dst, dequantize(meta, codebooks, indices))


if __name__ == "__main__":
    main()
