#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
#
# Writes tests/data/golden.mpqw from the byte layout alone, without the C++
# writer, so the loader is checked against an independent producer.

import struct
import sys
import zlib


def u16(v): return struct.pack("<H", v)
def u32(v): return struct.pack("<I", v)
def f32s(vs): return b"".join(struct.pack("<f", v) for v in vs)


def record(name, dtype, dims, payload, axis=None, scales=(), mins=()):
    out = u16(len(name)) + name.encode() + bytes([dtype]) + u32(len(dims))
    out += b"".join(u32(d) for d in dims)
    if dtype in (2, 3):
        out += bytes([255 if axis is None else axis]) + f32s(scales) + f32s(mins)
    return out + payload


def int4(codes, row):
    out = bytearray()
    for r in range(0, len(codes), row):
        chunk = list(codes[r:r + row]) + ([0] if row % 2 else [])
        for i in range(0, len(chunk), 2):
            out.append((chunk[i] & 0xF) | ((chunk[i + 1] & 0xF) << 4))
    return bytes(out)


body = b"MPQW" + u32(1)
body += b"".join(u32(v) for v in (1, 4, 1, 8, 6, 2)) + bytes([0]) + u32(2)
recs = [
    record("a", 0, [2, 2], f32s([1.5, -2.0, 0.25, 3.0])),
    record("b", 1, [3], struct.pack("<3e", 1.0, -0.5, 65504.0)),
    record("c", 2, [2, 3], bytes(b & 0xFF for b in [-128, 0, 127, -1, 5, -7]), 0, [0.5, 0.25], [-1.0, 0.0]),
    record("d", 3, [2, 3], int4([-8, 7, 0, 1, -1, 3], 3), None, [0.125], [-1.0]),
]
body += u32(len(recs)) + b"".join(recs)
body += u32(zlib.crc32(body) & 0xFFFFFFFF)
with open(sys.argv[1] if len(sys.argv) > 1 else "tests/data/golden.mpqw", "wb") as f:
    f.write(body)
