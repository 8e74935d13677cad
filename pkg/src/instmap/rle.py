"""COCO-style run-length encoding of binary masks.

Runs are taken over the column-major (Fortran) flattening of the mask and
start with a run of zeros. Counts travel either as a list of ints, as a
whitespace-separated string of ints, or as the compact COCO character
string.
"""

from __future__ import annotations

import numpy as np


def encode_counts(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def decode_counts(counts, shape) -> np.ndarray:
    h, w = (int(s) for s in shape)
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("negative run length")
    if counts.sum() != h * w:
        raise ValueError(f"run lengths sum to {counts.sum()}, expected {h * w}")
    values = np.zeros(counts.size, dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def counts_to_string(counts) -> str:
    """Compact COCO string (LEB128-like, 5 bits per char, delta-coded)."""
    out = []
    cnts = [int(c) for c in counts]
    for i, x in enumerate(cnts):
        if i > 2:
            x -= cnts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def string_to_counts(s: str) -> list[int]:
    cnts: list[int] = []
    p = 0
    n = len(s)
    while p < n:
        x = 0
        k = 0
        more = True
        while more:
            if p >= n:
                raise ValueError("truncated RLE string")
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(cnts) > 2:
            x += cnts[-2]
        cnts.append(x)
    return cnts


def encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    return {"size": list(mask.shape), "counts": counts_to_string(encode_counts(mask))}


def decode(rle: dict) -> np.ndarray:
    size = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, str):
        tokens = counts.split()
        if len(tokens) > 1:
            return decode_counts([int(tok) for tok in tokens], size)
        try:
            return decode_counts(string_to_counts(counts.strip()), size)
        except ValueError:
            if not counts.strip().isdigit():
                raise
            return decode_counts([int(counts)], size)
    return decode_counts(counts, size)
