"""Run-length encoding for binary masks.

Encoding: the mask is flattened row-major, and the code is the list of run
lengths of alternating values starting with the zero-run (a leading 0 is
emitted when the mask starts with a foreground pixel). The run lengths of a
valid code sum to height * width.
"""

import numpy as np

from .errors import SchemaError


def encode_mask(mask: np.ndarray) -> list[int]:
    """Encode a 2-D boolean (or 0/1) array as alternating run lengths."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise SchemaError(f"mask must be 2-D, got shape {mask.shape}")
    flat = (np.ravel(mask, order="C") != 0).astype(np.int8)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat))
    edges = np.concatenate(([-1], change, [flat.size - 1]))
    runs = np.diff(edges).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_mask(runs: list[int], height: int, width: int) -> np.ndarray:
    """Decode alternating run lengths back to a 2-D boolean array."""
    if height < 0 or width < 0:
        raise SchemaError("mask dimensions must be non-negative")
    total = height * width
    runs_arr = np.asarray(runs, dtype=np.int64)
    if runs_arr.ndim != 1:
        raise SchemaError("rle must be a flat list of run lengths")
    if runs_arr.size and runs_arr.min() < 0:
        raise SchemaError("rle run lengths must be non-negative")
    if int(runs_arr.sum()) != total:
        raise SchemaError(
            f"rle run lengths sum to {int(runs_arr.sum())}, expected {total}"
        )
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs_arr:
        if value:
            flat[pos : pos + run] = True
        pos += int(run)
        value = not value
    return flat.reshape(height, width)


def mask_area(mask: np.ndarray) -> int:
    """Number of foreground pixels."""
    return int(np.count_nonzero(mask))
