import numpy as np


def split_extent(n, parts):
    """Split ``n`` rows into ``parts`` contiguous runs.

    The first ``n % parts`` runs get one extra row, so 7 rows over 4 tiles
    gives (2, 2, 2, 1). Returns a list of (start, stop) pairs.
    """
    if parts < 1 or parts > n:
        raise ValueError(f"cannot split {n} rows into {parts} parts")
    base, extra = divmod(n, parts)
    bounds = []
    start = 0
    for i in range(parts):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def pad_chw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
